//! Closed-loop corridor run: arrivals, 1-tick mobility, a control round every
//! interval, per-tick energy delivery and the run outputs.
//!
//! Each tick, in order: due arrivals are inserted at their entry point,
//! speeds are updated, a control round runs if the tick starts an interval,
//! power is delivered for the tick, and vehicles move (those passing their
//! exit are retired).
//!
//! Delivery is checked against the stripe the vehicle is actually on at the
//! start of the tick. Under the MPC a vehicle draws its assigned power only
//! while it is on the stripe the plan coupled it with; under the benchmark
//! the static budgets are water-filled every tick among the vehicles asking
//! for power. Either way a vehicle never takes more than it can store before
//! reaching its target. On the tick a vehicle exits, power and consumption
//! are prorated by the fraction of the tick it spent on the road.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::benchmark::{allocate_benchmark, AllocationPlan, BenchmarkDemand};
use crate::energy::{apply_soc_dynamics, consumption_at, fill_limit, requested_power};
use crate::error::{Error, Result};
use crate::mobility::{self, occupancy, VehicleState};
use crate::mpc::{MpcController, MpcInstance, QpStats};
use crate::protocol::{build_instance, collect_reports, dispatch_allocations, LogHeader, RoundLog, RoundLogWriter};
use crate::scenario::{draw_profiles, generate_arrivals, Arrival, Scenario};
use crate::types::{Direction, Strategy, StripeId, VehicleId};

const SECONDS_PER_HOUR: f64 = 3600.0;

/// One retired vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    pub id: VehicleId,
    pub is_vut: bool,
    pub entry_node: usize,
    pub exit_node: usize,
    pub soc_init: f64,
    pub soc_target: f64,
    pub soc_exit: f64,
    pub entry_time: f64,
    pub exit_time: f64,
    /// Grid-side energy received on the corridor, kWh.
    pub energy_kwh: f64,
    pub capacity_kwh: f64,
    /// Entered during the measurement window.
    pub measured: bool,
}

/// Time-averaged power over one control interval, kW.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRecord {
    /// Interval start, s.
    pub time: f64,
    /// Uncoordinated demand of the vehicles on stripes.
    pub requested_kw: f64,
    pub delivered_kw: f64,
    /// Indexed by stripe id.
    pub per_stripe_kw: Vec<f64>,
}

/// Cumulative grid-side energy of a measured vehicle, sampled at every
/// control round and at exit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySample {
    pub time: f64,
    pub id: VehicleId,
    pub soc: f64,
    pub energy_kwh: f64,
}

/// Run-wide energy balance, kWh. `battery_gain + clamped` must equal
/// `charged - consumed`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyAudit {
    /// Sum of `(soc_now - soc_init) * E` over every inserted vehicle.
    pub battery_gain_kwh: f64,
    /// Energy removed by the `[0, target]` clamp.
    pub clamped_kwh: f64,
    /// Energy stored after coil losses, `eta * P * dt`.
    pub charged_kwh: f64,
    /// Grid-side energy, `P * dt`.
    pub delivered_kwh: f64,
    pub consumed_kwh: f64,
}

impl EnergyAudit {
    /// Relative imbalance of the energy identity.
    pub fn imbalance(&self) -> f64 {
        let lhs = self.battery_gain_kwh + self.clamped_kwh;
        let rhs = self.charged_kwh - self.consumed_kwh;
        let scale = self.charged_kwh.abs() + self.consumed_kwh.abs();
        if scale == 0.0 {
            (lhs - rhs).abs()
        } else {
            (lhs - rhs).abs() / scale
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub scenario: Scenario,
    pub exits: Vec<ExitRecord>,
    pub intervals: Vec<IntervalRecord>,
    pub samples: Vec<EnergySample>,
    /// One entry per MPC round; empty for the benchmark.
    pub solver: Vec<QpStats>,
    pub audit: EnergyAudit,
    pub inserted: usize,
    pub on_road_at_end: usize,
}

impl RunResult {
    pub fn strategy(&self) -> Strategy {
        self.scenario.sim.strategy
    }

    pub fn seed(&self) -> u64 {
        self.scenario.demand.seed
    }

    /// `[warmup, warmup + measure)`.
    pub fn measurement_window(&self) -> (f64, f64) {
        let sim = &self.scenario.sim;
        (sim.warmup, sim.warmup + sim.measure)
    }

    pub fn measured_exits(&self) -> impl Iterator<Item = &ExitRecord> {
        self.exits.iter().filter(|e| e.measured)
    }

    pub fn measured_intervals(&self) -> impl Iterator<Item = &IntervalRecord> {
        let (a, b) = self.measurement_window();
        self.intervals.iter().filter(move |r| r.time >= a && r.time < b)
    }

    pub fn summary(&self) -> RunSummary {
        let intervals: Vec<&IntervalRecord> = self.measured_intervals().collect();
        let mean = |f: fn(&IntervalRecord) -> f64| {
            if intervals.is_empty() {
                0.0
            } else {
                intervals.iter().map(|r| f(r)).sum::<f64>() / intervals.len() as f64
            }
        };
        let mean_delivered_kw = mean(|r| r.delivered_kw);
        let iterations: Vec<usize> = self.solver.iter().map(|s| s.iterations).collect();
        RunSummary {
            strategy: self.strategy(),
            seed: self.seed(),
            inserted: self.inserted,
            exited: self.exits.len(),
            measured_exits: self.measured_exits().count(),
            on_road_at_end: self.on_road_at_end,
            mean_requested_kw: mean(|r| r.requested_kw),
            mean_delivered_kw,
            utilization: mean_delivered_kw / self.scenario.sim.total_power,
            solver_rounds: self.solver.len(),
            max_iterations: iterations.iter().copied().max().unwrap_or(0),
            mean_iterations: if iterations.is_empty() {
                0.0
            } else {
                iterations.iter().sum::<usize>() as f64 / iterations.len() as f64
            },
            max_clip_kw: self.solver.iter().map(|s| s.max_clip).fold(0.0, f64::max),
            energy: self.audit.clone(),
        }
    }
}

/// Headline numbers of a run, over the measurement window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub seed: u64,
    pub inserted: usize,
    pub exited: usize,
    pub measured_exits: usize,
    pub on_road_at_end: usize,
    pub mean_requested_kw: f64,
    pub mean_delivered_kw: f64,
    /// Mean delivered power over the total budget.
    pub utilization: f64,
    pub solver_rounds: usize,
    pub max_iterations: usize,
    pub mean_iterations: f64,
    pub max_clip_kw: f64,
    pub energy: EnergyAudit,
}

/// What a control round saw and decided, handed to the run observer.
pub struct RoundEvent<'a> {
    pub round: &'a RoundLog,
    pub instance: &'a MpcInstance,
    pub plan: &'a AllocationPlan,
}

/// Runs the scenario to completion.
pub fn run(scenario: &Scenario) -> Result<RunResult> {
    run_observed(scenario, |_| Ok(()))
}

/// Runs the scenario, calling `observe` after every control round.
pub fn run_observed(scenario: &Scenario, mut observe: impl FnMut(&RoundEvent) -> Result<()>) -> Result<RunResult> {
    scenario.validate()?;
    let sim = &scenario.sim;
    let horizon = sim.warmup + sim.measure;
    let arrivals = generate_arrivals(&scenario.demand, 0.0, horizon)?;
    let profiles = draw_profiles(&arrivals, sim, scenario.demand.seed);
    let n_ticks = (horizon / sim.tick).round() as usize;
    let per_interval = sim.ticks_per_interval();
    let history = (sim.avg_speed_window / sim.tick).round() as usize;

    let mut engine = Engine::new(scenario);

    let mut next = 0;
    let mut acc = IntervalAcc::new(0.0, scenario.stripes.len());
    for tick in 0..n_ticks {
        let t = tick as f64 * sim.tick;
        while next < arrivals.len() && arrivals[next].time <= t {
            engine.insert(next as u64, &arrivals[next], &profiles[next], t);
            next += 1;
        }
        mobility::update_speeds(&mut engine.vehicles, &scenario.corridor);
        let view = engine.tick_view();
        if tick % per_interval == 0 {
            if tick > 0 {
                engine.result.intervals.push(acc.finish());
            }
            acc = IntervalAcc::new(t, scenario.stripes.len());
            engine.control_round(t, &view, &mut observe)?;
        }
        engine.deliver(t, &view, &mut acc);
        for exit in mobility::step(&mut engine.vehicles, &scenario.corridor, sim.tick, history) {
            engine.retire(exit.vehicle, t);
        }
    }
    if n_ticks > 0 {
        engine.result.intervals.push(acc.finish());
    }
    Ok(engine.finish())
}

/// Per-tick facts shared by the round and the delivery, indexed like the
/// live vehicle list.
struct TickView {
    stripe: Vec<Option<StripeId>>,
    request: Vec<f64>,
    /// Fraction of the tick spent on the road.
    on_road: Vec<f64>,
}

struct IntervalAcc {
    time: f64,
    ticks: usize,
    requested: f64,
    delivered: f64,
    per_stripe: Vec<f64>,
}

impl IntervalAcc {
    fn new(time: f64, stripes: usize) -> Self {
        IntervalAcc { time, ticks: 0, requested: 0.0, delivered: 0.0, per_stripe: vec![0.0; stripes] }
    }

    fn finish(&self) -> IntervalRecord {
        let n = self.ticks.max(1) as f64;
        IntervalRecord {
            time: self.time,
            requested_kw: self.requested / n,
            delivered_kw: self.delivered / n,
            per_stripe_kw: self.per_stripe.iter().map(|p| p / n).collect(),
        }
    }
}

struct Engine<'a> {
    scenario: &'a Scenario,
    vehicles: Vec<VehicleState>,
    /// Grid-side energy received so far, kWh.
    energy: BTreeMap<VehicleId, f64>,
    controller: MpcController,
    plan: AllocationPlan,
    result: RunResult,
}

impl<'a> Engine<'a> {
    fn new(scenario: &'a Scenario) -> Self {
        Engine {
            scenario,
            vehicles: Vec::new(),
            energy: BTreeMap::new(),
            controller: MpcController::new(scenario.sim.solver.clone()),
            plan: AllocationPlan::default(),
            result: RunResult {
                scenario: scenario.clone(),
                exits: Vec::new(),
                intervals: Vec::new(),
                samples: Vec::new(),
                solver: Vec::new(),
                audit: EnergyAudit::default(),
                inserted: 0,
                on_road_at_end: 0,
            },
        }
    }

    fn insert(&mut self, id: u64, a: &Arrival, p: &crate::scenario::VehicleProfile, t: f64) {
        let corridor = &self.scenario.corridor;
        let (entry, exit) = (corridor.node_position(a.entry), corridor.node_position(a.exit));
        let v = VehicleState {
            id: VehicleId(id),
            direction: Direction::between(entry, exit),
            position: entry,
            speed: corridor.free_flow_speed,
            entry_node: a.entry,
            exit_node: a.exit,
            exit_pos: exit,
            entry_time: t,
            soc: p.soc_init,
            soc_init: p.soc_init,
            soc_target: p.soc_target,
            capacity_kwh: p.capacity_kwh,
            p_on: p.p_on,
            is_vut: a.is_vut,
            recent_speeds: Default::default(),
        };
        self.energy.insert(v.id, 0.0);
        self.vehicles.push(v);
        self.result.inserted += 1;
    }

    fn is_measured(&self, entry_time: f64) -> bool {
        let sim = &self.scenario.sim;
        entry_time >= sim.warmup && entry_time < sim.warmup + sim.measure
    }

    fn tick_view(&self) -> TickView {
        let sc = self.scenario;
        let sim = &sc.sim;
        let mut view = TickView {
            stripe: Vec::with_capacity(self.vehicles.len()),
            request: Vec::with_capacity(self.vehicles.len()),
            on_road: Vec::with_capacity(self.vehicles.len()),
        };
        for v in &self.vehicles {
            let stripe = occupancy(v.direction, v.position, &sc.stripes);
            let coil = stripe.map_or(0.0, |s| sc.stripes[s.0].coil_power_nom);
            let drive = sim.consumption.driving_power(v.speed);
            view.request.push(requested_power(v, stripe.is_some(), coil, sim.charge_time_constant, drive));
            view.stripe.push(stripe);
            let travel = v.speed * sim.tick;
            view.on_road.push(if travel > 0.0 { (v.distance_to_exit() / travel).min(1.0) } else { 1.0 });
        }
        view
    }

    fn benchmark_plan(&self, t: f64, view: &TickView) -> AllocationPlan {
        let stripes = &self.scenario.stripes;
        let demands: Vec<BenchmarkDemand> = self
            .vehicles
            .iter()
            .zip(&view.stripe)
            .zip(&view.request)
            .map(|((v, stripe), request)| BenchmarkDemand {
                id: v.id,
                stripe: *stripe,
                request: *request,
                cap: v.p_on.min(stripe.map_or(0.0, |s| stripes[s.0].coil_power_nom)),
            })
            .collect();
        allocate_benchmark(&demands, stripes, t)
    }

    fn control_round(
        &mut self,
        t: f64,
        view: &TickView,
        observe: &mut impl FnMut(&RoundEvent) -> Result<()>,
    ) -> Result<()> {
        let sc = self.scenario;
        let reports = collect_reports(&self.vehicles);
        let instance = build_instance(t, &reports, sc)?;
        let start = Instant::now();
        let plan = match sc.sim.strategy {
            Strategy::Mpc => {
                let step = self.controller.solve_step(&instance)?;
                self.result.solver.push(step.stats);
                step.plan
            }
            Strategy::Benchmark => self.benchmark_plan(t, view),
        };
        let solve_ms = start.elapsed().as_secs_f64() * 1e3;
        let allocations = dispatch_allocations(&plan, &reports, &instance, sc)?;
        let round = RoundLog { timestamp: t, reports, allocations, solve_ms };
        observe(&RoundEvent { round: &round, instance: &instance, plan: &plan })?;
        self.plan = plan;

        for v in &self.vehicles {
            if self.is_measured(v.entry_time) {
                self.result.samples.push(EnergySample {
                    time: t,
                    id: v.id,
                    soc: v.soc,
                    energy_kwh: self.energy[&v.id],
                });
            }
        }
        Ok(())
    }

    fn deliver(&mut self, t: f64, view: &TickView, acc: &mut IntervalAcc) {
        let sc = self.scenario;
        let sim = &sc.sim;
        let tick_plan = match sim.strategy {
            Strategy::Benchmark => Some(self.benchmark_plan(t, view)),
            Strategy::Mpc => None,
        };
        let audit = &mut self.result.audit;
        for (i, v) in self.vehicles.iter_mut().enumerate() {
            let dt = sim.tick * view.on_road[i];
            let stripe = view.stripe[i];
            let assigned = match (&tick_plan, stripe) {
                (_, None) => 0.0,
                (Some(plan), Some(_)) => plan.vehicle_power(v.id),
                (None, Some(s)) => {
                    if self.plan.coupling.get(&v.id) == Some(&s) {
                        self.plan.vehicle_power(v.id)
                    } else {
                        0.0
                    }
                }
            };
            let eta = stripe.map_or(1.0, |s| sc.stripes[s.0].efficiency);
            let used = consumption_at(&sim.consumption, v.speed, v.soc, v.capacity_kwh, dt);
            let power = if dt > 0.0 { assigned.min(fill_limit(v, eta, used, dt)).max(0.0) } else { 0.0 };
            let update = apply_soc_dynamics(v, power, eta, used, dt);
            v.soc = update.soc;

            let grid_kwh = power * dt / SECONDS_PER_HOUR;
            *self.energy.get_mut(&v.id).expect("inserted vehicle") += grid_kwh;
            audit.delivered_kwh += grid_kwh;
            audit.charged_kwh += eta * grid_kwh;
            audit.consumed_kwh += used;
            audit.clamped_kwh += update.clamped_kwh;

            acc.requested += view.request[i] * view.on_road[i];
            acc.delivered += power * view.on_road[i];
            if let Some(s) = stripe {
                acc.per_stripe[s.0] += power * view.on_road[i];
            }
        }
        acc.ticks += 1;
    }

    /// Records a vehicle that passed its exit during the tick starting at `t`.
    fn retire(&mut self, v: VehicleState, t: f64) {
        let sim = &self.scenario.sim;
        let travel = v.speed * sim.tick;
        let behind = ((v.position - v.exit_pos) * v.direction.sign()).max(0.0);
        let fraction = if travel > 0.0 { (1.0 - behind / travel).clamp(0.0, 1.0) } else { 1.0 };
        let exit_time = t + fraction * sim.tick;
        let energy_kwh = self.energy[&v.id];
        let measured = self.is_measured(v.entry_time);
        if measured {
            self.result.samples.push(EnergySample { time: exit_time, id: v.id, soc: v.soc, energy_kwh });
        }
        self.result.audit.battery_gain_kwh += (v.soc - v.soc_init) * v.capacity_kwh;
        self.energy.remove(&v.id);
        self.result.exits.push(ExitRecord {
            id: v.id,
            is_vut: v.is_vut,
            entry_node: v.entry_node,
            exit_node: v.exit_node,
            soc_init: v.soc_init,
            soc_target: v.soc_target,
            soc_exit: v.soc,
            entry_time: v.entry_time,
            exit_time,
            energy_kwh,
            capacity_kwh: v.capacity_kwh,
            measured,
        });
    }

    fn finish(mut self) -> RunResult {
        for v in &self.vehicles {
            self.result.audit.battery_gain_kwh += (v.soc - v.soc_init) * v.capacity_kwh;
        }
        self.result.on_road_at_end = self.vehicles.len();
        self.result
    }
}

pub const EXITS_FILE: &str = "exits.csv";
pub const INTERVALS_FILE: &str = "intervals.csv";
pub const ENERGY_FILE: &str = "energy.csv";
pub const SOLVER_FILE: &str = "qp.csv";
pub const RUN_FILE: &str = "run.json";
pub const ROUNDS_FILE: &str = "rounds.log";

/// Leading columns of `intervals.csv`; one `stripe_<id>` column per stripe
/// follows.
pub const INTERVAL_COLUMNS: [&str; 4] = ["time", "requested_kw", "delivered_kw", "capacity_kw"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    scenario: Scenario,
    summary: RunSummary,
}

/// Runs the scenario and writes every output file into `dir`, which is
/// created if needed.
pub fn run_to_dir(scenario: &Scenario, dir: &Path) -> Result<RunResult> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = LogHeader::new(scenario.sim.strategy, scenario.clone());
    let mut log = RoundLogWriter::create(&dir.join(ROUNDS_FILE), &header)?;
    let result = run_observed(scenario, |ev| log.append(ev.round))?;
    log.finish()?;
    write_outputs(&result, dir)?;
    Ok(result)
}

/// Writes the CSV and JSON outputs of a finished run (not the round log).
pub fn write_outputs(result: &RunResult, dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(EXITS_FILE))?;
    for e in &result.exits {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(dir.join(EXITS_FILE), e))?;

    let mut w = csv::Writer::from_path(dir.join(INTERVALS_FILE))?;
    let mut header: Vec<String> = INTERVAL_COLUMNS.iter().map(|c| c.to_string()).collect();
    header.extend(result.scenario.stripes.iter().map(|s| format!("stripe_{}", s.id.0)));
    w.write_record(&header)?;
    let capacity = result.scenario.sim.total_power;
    for r in &result.intervals {
        let mut row =
            vec![r.time.to_string(), r.requested_kw.to_string(), r.delivered_kw.to_string(), capacity.to_string()];
        row.extend(r.per_stripe_kw.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(dir.join(INTERVALS_FILE), e))?;

    let mut w = csv::Writer::from_path(dir.join(ENERGY_FILE))?;
    for s in &result.samples {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(dir.join(ENERGY_FILE), e))?;

    let mut w = csv::Writer::from_path(dir.join(SOLVER_FILE))?;
    for s in &result.solver {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(dir.join(SOLVER_FILE), e))?;

    let path = dir.join(RUN_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, &RunFile { scenario: result.scenario.clone(), summary: result.summary() })?;
    out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    out.flush().map_err(|e| Error::io(&path, e))
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// Reads back the outputs written by [`write_outputs`].
pub fn load_run(dir: &Path) -> Result<RunResult> {
    let path = dir.join(RUN_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let run: RunFile = serde_json::from_str(&text)?;
    let stripes = run.scenario.stripes.len();

    let path = dir.join(INTERVALS_FILE);
    let mut r = csv::Reader::from_path(&path)?;
    let header = r.headers()?.clone();
    let origin = path.display().to_string();
    let bad = |line: usize, msg: String| Error::Parse { path: origin.clone(), line, msg };
    if header.len() != INTERVAL_COLUMNS.len() + stripes
        || INTERVAL_COLUMNS.iter().zip(header.iter()).any(|(a, b)| *a != b)
    {
        return Err(bad(1, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut intervals = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let values: Vec<f64> = row
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| bad(i + 2, format!("'{v}': {e}"))))
            .collect::<Result<_>>()?;
        if values.len() != header.len() {
            return Err(bad(i + 2, "wrong number of fields".into()));
        }
        intervals.push(IntervalRecord {
            time: values[0],
            requested_kw: values[1],
            delivered_kw: values[2],
            per_stripe_kw: values[INTERVAL_COLUMNS.len()..].to_vec(),
        });
    }

    let solver_path = dir.join(SOLVER_FILE);
    let solver = if solver_path.exists() { read_csv(&solver_path)? } else { Vec::new() };
    Ok(RunResult {
        exits: read_csv(&dir.join(EXITS_FILE))?,
        intervals,
        samples: read_csv(&dir.join(ENERGY_FILE))?,
        solver,
        audit: run.summary.energy,
        inserted: run.summary.inserted,
        on_road_at_end: run.summary.on_road_at_end,
        scenario: run.scenario,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::test_vehicle;
    use crate::scenario::ScenarioConfig;

    fn scenario(strategy: Strategy) -> Scenario {
        let mut cfg = ScenarioConfig::default();
        cfg.sim.strategy = strategy;
        cfg.build().unwrap()
    }

    fn on_stripe(sc: &Scenario, id: u64) -> VehicleState {
        let s = &sc.stripes[0];
        let mut v = test_vehicle(id, 0.5 * (s.start_pos + s.end_pos));
        v.direction = s.direction;
        v.exit_pos = sc.corridor.node_position(if s.direction == Direction::Forward { 5 } else { 1 });
        v
    }

    fn add(engine: &mut Engine, v: VehicleState) {
        engine.energy.insert(v.id, 0.0);
        engine.vehicles.push(v);
    }

    #[test]
    fn empty_plan_applies_only_consumption() {
        let sc = scenario(Strategy::Mpc);
        let mut engine = Engine::new(&sc);
        add(&mut engine, on_stripe(&sc, 0));
        let before = engine.vehicles[0].clone();
        let view = engine.tick_view();
        assert!(view.stripe[0].is_some() && view.request[0] > 0.0);
        let mut acc = IntervalAcc::new(0.0, sc.stripes.len());
        engine.deliver(0.0, &view, &mut acc);
        let used = sc.sim.consumption.driving_power(before.speed) / SECONDS_PER_HOUR;
        let after = &engine.vehicles[0];
        assert!(((before.soc - after.soc) * before.capacity_kwh - used).abs() < 1e-12);
        assert_eq!(engine.result.audit.delivered_kwh, 0.0);
        assert_eq!(acc.finish().delivered_kw, 0.0);
    }

    #[test]
    fn coupled_vehicle_draws_its_assignment() {
        let sc = scenario(Strategy::Mpc);
        let mut engine = Engine::new(&sc);
        let v = on_stripe(&sc, 0);
        engine.plan.per_vehicle.insert(v.id, 40.0);
        engine.plan.coupling.insert(v.id, sc.stripes[0].id);
        add(&mut engine, v.clone());
        let view = engine.tick_view();
        let mut acc = IntervalAcc::new(0.0, sc.stripes.len());
        engine.deliver(0.0, &view, &mut acc);
        let eta = sc.stripes[0].efficiency;
        let used = sc.sim.consumption.driving_power(v.speed) / SECONDS_PER_HOUR;
        let gain = (engine.vehicles[0].soc - v.soc) * v.capacity_kwh;
        assert!((gain - (eta * 40.0 / SECONDS_PER_HOUR - used)).abs() < 1e-12);
        assert_eq!(acc.finish().per_stripe_kw[0], 40.0);

        // The same assignment is void once the vehicle sits on another stripe.
        engine.plan.coupling.insert(v.id, sc.stripes[1].id);
        let view = engine.tick_view();
        engine.deliver(1.0, &view, &mut acc);
        assert!((engine.result.audit.delivered_kwh - 40.0 / SECONDS_PER_HOUR).abs() < 1e-15);
    }

    #[test]
    fn exit_tick_is_prorated() {
        let sc = scenario(Strategy::Benchmark);
        let mut engine = Engine::new(&sc);
        let mut v = test_vehicle(0, 0.0);
        v.speed = 10.0;
        v.position = v.exit_pos - 2.5;
        add(&mut engine, v.clone());
        let view = engine.tick_view();
        assert_eq!(view.on_road[0], 0.25);
        let mut acc = IntervalAcc::new(0.0, sc.stripes.len());
        engine.deliver(7.0, &view, &mut acc);
        let used = sc.sim.consumption.driving_power(10.0) * 0.25 / SECONDS_PER_HOUR;
        assert!(((v.soc - engine.vehicles[0].soc) * v.capacity_kwh - used).abs() < 1e-12);

        let mut gone = engine.vehicles.remove(0);
        gone.position += 10.0;
        engine.retire(gone, 7.0);
        assert_eq!(engine.result.exits[0].exit_time, 7.25);
        let result = engine.finish();
        assert!(result.audit.imbalance() < 1e-9, "{:?}", result.audit);
    }
}
