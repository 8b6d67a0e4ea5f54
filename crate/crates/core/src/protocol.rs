//! Synchronous exchange between the vehicles and the power manager, and the
//! round log that records it.
//!
//! A round is: every vehicle on the corridor reports its battery and route,
//! the manager computes a plan, and every reporting vehicle receives one
//! allocation message.
//!
//! # Log format
//!
//! One JSON object per line. The first line is a header,
//!
//! ```text
//! {"format":"dic-rounds","version":1,"strategy":"mpc","scenario":{...}}
//! ```
//!
//! followed by one [`RoundLog`] per line. Field names of the messages are the
//! upper-case wire names (`BC`, `BL`, `PASS`, ...). An empty file is a valid
//! log with no rounds.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::benchmark::AllocationPlan;
use crate::error::{Error, Result};
use crate::mobility::{self, Kinematics, VehicleState};
use crate::mpc::{consumption_forecast, MpcController, MpcInstance, MpcVehicle};
use crate::scenario::Scenario;
use crate::types::{Direction, Strategy, VehicleId};

pub const LOG_FORMAT: &str = "dic-rounds";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Route {
    /// 1-based entry point.
    pub entry: usize,
    /// 1-based exit point.
    pub exit: usize,
    /// Current corridor coordinate, m.
    pub position: f64,
}

/// Vehicle to manager.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleReport {
    pub id: VehicleId,
    /// Battery capacity, kWh.
    #[serde(rename = "BC")]
    pub battery_capacity: f64,
    /// Battery level, fraction.
    #[serde(rename = "BL")]
    pub battery_level: f64,
    /// Battery target at exit, fraction.
    #[serde(rename = "BTE")]
    pub battery_target: f64,
    /// Largest power the pad absorbs, kW.
    #[serde(rename = "PADP")]
    pub pad_power: f64,
    #[serde(rename = "ROUTE")]
    pub route: Route,
    /// Mean speed over the recent past, m/s.
    #[serde(rename = "VMEAN")]
    pub mean_speed: f64,
}

impl VehicleReport {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.battery_level)
            && self.battery_target > 0.0
            && self.battery_target <= 1.0
            && self.battery_capacity > 0.0
            && self.pad_power > 0.0
            && self.mean_speed > 0.0
            && self.route.position.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Problem(format!("vehicle {} sent an invalid report", self.id)))
        }
    }
}

/// Manager to vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationMsg {
    pub id: VehicleId,
    /// Nominal coil power of the stripe the vehicle is expected on, kW.
    #[serde(rename = "PCOIL")]
    pub coil_power: f64,
    /// Assigned power for the next interval, kW.
    #[serde(rename = "PASS")]
    pub assigned_power: f64,
    /// Interval length, s.
    #[serde(rename = "DT")]
    pub interval: f64,
    /// Tolerance on the delivered power, kW.
    #[serde(rename = "PTOL")]
    pub tolerance: f64,
    /// Exit coordinate, m.
    #[serde(rename = "EXIT")]
    pub exit_position: f64,
    /// Remaining time on the corridor, s.
    #[serde(rename = "TEX")]
    pub time_to_exit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundLog {
    pub timestamp: f64,
    pub reports: Vec<VehicleReport>,
    pub allocations: Vec<AllocationMsg>,
    pub solve_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    pub strategy: Strategy,
    pub scenario: Scenario,
}

impl LogHeader {
    pub fn new(strategy: Strategy, scenario: Scenario) -> Self {
        LogHeader { format: LOG_FORMAT.to_string(), version: LOG_VERSION, strategy, scenario }
    }
}

/// One report per vehicle on the corridor, in id order.
pub fn collect_reports(vehicles: &[VehicleState]) -> Vec<VehicleReport> {
    let mut reports: Vec<VehicleReport> = vehicles
        .iter()
        .map(|v| VehicleReport {
            id: v.id,
            battery_capacity: v.capacity_kwh,
            battery_level: v.soc,
            battery_target: v.soc_target,
            pad_power: v.p_on,
            route: Route { entry: v.entry_node, exit: v.exit_node, position: v.position },
            mean_speed: v.mean_speed(),
        })
        .collect();
    reports.sort_by_key(|r| r.id);
    reports
}

/// The allocator input for a round. Everything the MPC sees is derived
/// from the reports and the scenario, so a logged round can be replayed.
pub fn build_instance(time: f64, reports: &[VehicleReport], scenario: &Scenario) -> Result<MpcInstance> {
    let sim = &scenario.sim;
    let cfg = &sim.mpc;
    let mut vehicles = Vec::with_capacity(reports.len());
    for r in reports {
        r.validate()?;
        let kin = route_kinematics(r, scenario)?;
        let prediction = mobility::predict(r.id, kin, &scenario.stripes, cfg.horizon, cfg.delta_t);
        let consumption = consumption_forecast(
            sim.consumption.driving_power(r.mean_speed),
            prediction.tau,
            r.battery_level,
            r.battery_capacity,
            cfg.horizon,
            cfg.delta_t,
        );
        vehicles.push(MpcVehicle {
            id: r.id,
            soc: r.battery_level,
            soc_target: r.battery_target,
            capacity_kwh: r.battery_capacity,
            p_on: r.pad_power,
            prediction,
            consumption,
        });
    }
    Ok(MpcInstance {
        time,
        vehicles,
        stripes: scenario.stripes.clone(),
        total_power: sim.total_power,
        config: cfg.clone(),
    })
}

fn route_kinematics(r: &VehicleReport, scenario: &Scenario) -> Result<Kinematics> {
    let nodes = scenario.corridor.node_positions.len();
    if !(1..=nodes).contains(&r.route.entry) || !(1..=nodes).contains(&r.route.exit) || r.route.entry == r.route.exit {
        return Err(Error::Problem(format!("vehicle {} reported an invalid route", r.id)));
    }
    let entry = scenario.corridor.node_position(r.route.entry);
    let exit = scenario.corridor.node_position(r.route.exit);
    Ok(Kinematics {
        direction: Direction::between(entry, exit),
        position: r.route.position,
        exit_pos: exit,
        mean_speed: r.mean_speed,
    })
}

/// One message per reported vehicle, in report order. `instance` must have
/// been built from `reports`. Fails if the plan does not cover a vehicle.
pub fn dispatch_allocations(
    plan: &AllocationPlan,
    reports: &[VehicleReport],
    instance: &MpcInstance,
    scenario: &Scenario,
) -> Result<Vec<AllocationMsg>> {
    debug_assert!(reports.iter().map(|r| r.id).eq(instance.vehicles.iter().map(|v| v.id)));
    let mut out = Vec::with_capacity(reports.len());
    for (r, v) in reports.iter().zip(&instance.vehicles) {
        let assigned = *plan.per_vehicle.get(&r.id).ok_or(Error::MissingVehicle(r.id))?;
        out.push(AllocationMsg {
            id: r.id,
            coil_power: v.prediction.steps[0].map_or(0.0, |s| instance.stripes[s.0].coil_power_nom),
            assigned_power: assigned,
            interval: instance.config.delta_t,
            tolerance: 0.0,
            exit_position: scenario.corridor.node_position(r.route.exit),
            time_to_exit: v.prediction.tau,
        });
    }
    Ok(out)
}

pub struct RoundLogWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl RoundLogWriter {
    pub fn create(path: &Path, header: &LogHeader) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = RoundLogWriter { out: BufWriter::new(file), path: path.to_path_buf() };
        w.write_line(header)?;
        Ok(w)
    }

    pub fn append(&mut self, round: &RoundLog) -> Result<()> {
        self.write_line(round)
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    fn write_line<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }
}

/// A parsed log: header (absent for an empty file) and rounds in order.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLogFile {
    pub header: Option<LogHeader>,
    pub rounds: Vec<RoundLog>,
}

pub fn parse_log(text: &str, origin: &str) -> Result<RoundLogFile> {
    let err = |line: usize, msg: String| Error::Parse { path: origin.to_string(), line, msg };
    let mut header: Option<LogHeader> = None;
    let mut rounds = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: LogHeader = serde_json::from_str(line).map_err(|e| err(line_no, format!("bad header: {e}")))?;
            if h.format != LOG_FORMAT {
                return Err(err(line_no, format!("not a round log (format '{}')", h.format)));
            }
            if h.version != LOG_VERSION {
                return Err(err(line_no, format!("unsupported log version {}", h.version)));
            }
            header = Some(h);
            continue;
        }
        let round: RoundLog = serde_json::from_str(line).map_err(|e| err(line_no, e.to_string()))?;
        rounds.push(round);
    }
    Ok(RoundLogFile { header, rounds })
}

pub fn read_log(path: &Path) -> Result<RoundLogFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log(&text, &path.display().to_string())
}

/// Outcome of recomputing one logged round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayRound {
    pub timestamp: f64,
    pub vehicles: usize,
    /// Largest |PASS| difference against the logged messages, kW.
    pub max_pass_diff_kw: f64,
    /// Whether every recomputed message equals the logged one bit for bit.
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    /// Strategy that produced the log.
    pub logged_strategy: Option<Strategy>,
    pub rounds: Vec<ReplayRound>,
}

impl ReplayReport {
    pub fn max_pass_diff_kw(&self) -> f64 {
        self.rounds.iter().map(|r| r.max_pass_diff_kw).fold(0.0, f64::max)
    }

    pub fn identical(&self) -> bool {
        self.rounds.iter().all(|r| r.identical)
    }
}

/// Feeds the logged reports, round by round, to a fresh MPC controller using
/// the scenario from the log header and compares the resulting messages to
/// the logged ones. A log written by the benchmark replays as an A/B
/// comparison on the same traffic.
pub fn replay(log: &RoundLogFile) -> Result<ReplayReport> {
    let Some(header) = &log.header else {
        return Ok(ReplayReport { logged_strategy: None, rounds: Vec::new() });
    };
    let scenario = &header.scenario;
    let mut controller = MpcController::new(scenario.sim.solver.clone());
    let mut rounds = Vec::with_capacity(log.rounds.len());
    for round in &log.rounds {
        let instance = build_instance(round.timestamp, &round.reports, scenario)?;
        let step = controller.solve_step(&instance)?;
        let messages = dispatch_allocations(&step.plan, &round.reports, &instance, scenario)?;
        let identical = messages == round.allocations;
        let mut max_diff: f64 = 0.0;
        for m in &messages {
            let logged = round.allocations.iter().find(|a| a.id == m.id).map_or(0.0, |a| a.assigned_power);
            max_diff = max_diff.max((m.assigned_power - logged).abs());
        }
        for a in &round.allocations {
            if !messages.iter().any(|m| m.id == a.id) {
                max_diff = max_diff.max(a.assigned_power.abs());
            }
        }
        rounds.push(ReplayRound {
            timestamp: round.timestamp,
            vehicles: messages.len(),
            max_pass_diff_kw: max_diff,
            identical,
        });
    }
    Ok(ReplayReport { logged_strategy: Some(header.strategy), rounds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::test_vehicle;
    use crate::qp::SolverSettings;
    use crate::scenario::ScenarioConfig;
    use crate::types::Strategy as Policy;
    use crate::types::StripeId;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, Strategy};

    fn scenario() -> Scenario {
        ScenarioConfig::default().build().unwrap()
    }

    #[test]
    fn reports_copy_vehicle_fields() {
        let mut v = test_vehicle(7, 1234.5);
        v.soc = 0.3;
        v.soc_target = 0.8;
        v.capacity_kwh = 50.0;
        let r = &collect_reports(&[v])[0];
        assert_eq!((r.battery_capacity, r.battery_level, r.battery_target), (50.0, 0.3, 0.8));
        assert_eq!(r.pad_power, 150.0);
        assert_eq!(r.route, Route { entry: 1, exit: 5, position: 1234.5 });
        assert!(collect_reports(&[]).is_empty());
    }

    #[test]
    fn vut_reports_nearly_empty_battery() {
        let sc = scenario();
        let mut v = test_vehicle(1, 0.0);
        v.soc = sc.sim.vut_soc_init;
        v.soc_target = sc.sim.vut_soc_target;
        let r = &collect_reports(&[v])[0];
        assert_eq!((r.battery_level, r.battery_target), (0.02, 1.0));
    }

    #[test]
    fn dispatch_copies_the_first_step() {
        let sc = scenario();
        // One vehicle on the first stripe, one between stripes 0 and 1.
        let a = test_vehicle(1, 400.0);
        let b = test_vehicle(2, 1000.0);
        let reports = collect_reports(&[a, b]);
        let mut instance = build_instance(0.0, &reports, &sc).unwrap();
        instance.vehicles[1].prediction.steps[0] = None;
        let mut plan = AllocationPlan::default();
        plan.per_vehicle.insert(VehicleId(1), 100.0);
        plan.per_vehicle.insert(VehicleId(2), 0.0);
        let msgs = dispatch_allocations(&plan, &reports, &instance, &sc).unwrap();
        assert_eq!(msgs[0].assigned_power, 100.0);
        assert_eq!(msgs[0].interval, 5.0);
        assert_eq!(msgs[0].tolerance, 0.0);
        assert_eq!(msgs[0].coil_power, sc.stripes[0].coil_power_nom);
        assert_eq!(msgs[0].exit_position, sc.corridor.node_position(5));
        assert_eq!(msgs[1].coil_power, 0.0);

        plan.per_vehicle.remove(&VehicleId(2));
        assert!(matches!(
            dispatch_allocations(&plan, &reports, &instance, &sc),
            Err(Error::MissingVehicle(VehicleId(2)))
        ));
    }

    #[test]
    fn off_stripe_vehicle_is_assigned_nothing() {
        let sc = scenario();
        let mut v = test_vehicle(1, 950.0);
        v.speed = 0.5;
        let reports = collect_reports(&[v]);
        let mut instance = build_instance(0.0, &reports, &sc).unwrap();
        assert_eq!(instance.vehicles[0].prediction.steps[0], None);
        instance.vehicles[0].prediction.steps[3] = Some(StripeId(1));
        let step = MpcController::new(SolverSettings::default()).solve_step(&instance).unwrap();
        let msgs = dispatch_allocations(&step.plan, &reports, &instance, &sc).unwrap();
        assert_eq!(msgs[0].assigned_power, 0.0);
    }

    #[test]
    fn empty_and_truncated_logs() {
        let empty = parse_log("", "e.log").unwrap();
        assert!(empty.header.is_none() && empty.rounds.is_empty());

        let header = serde_json::to_string(&LogHeader::new(Policy::Mpc, scenario())).unwrap();
        let round = RoundLog { timestamp: 5.0, reports: Vec::new(), allocations: Vec::new(), solve_ms: 0.5 };
        let line = serde_json::to_string(&round).unwrap();
        let text = format!("{header}\n{line}\n{}\n", &line[..line.len() / 2]);
        match parse_log(&text, "t.log") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let ok = parse_log(&format!("{header}\n{line}\n"), "t.log").unwrap();
        assert_eq!(ok.rounds, vec![round]);
    }

    #[test]
    fn foreign_headers_are_rejected() {
        let mut h = LogHeader::new(Policy::Mpc, scenario());
        h.version = 99;
        let text = serde_json::to_string(&h).unwrap();
        assert!(matches!(parse_log(&text, "t.log"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_log("{\"timestamp\":1}\n", "t.log"), Err(Error::Parse { line: 1, .. })));
    }

    fn report() -> impl Strategy<Value = VehicleReport> {
        (
            any::<u64>(),
            1.0..200.0f64,
            0.0..=1.0f64,
            0.01..=1.0f64,
            1.0..400.0f64,
            1usize..=5,
            1usize..=5,
            -1e4..1e4f64,
            0.1..40.0f64,
        )
            .prop_map(|(id, bc, bl, bte, padp, entry, exit, position, v)| VehicleReport {
                id: VehicleId(id),
                battery_capacity: bc,
                battery_level: bl,
                battery_target: bte,
                pad_power: padp,
                route: Route { entry, exit, position },
                mean_speed: v,
            })
    }

    fn allocation() -> impl Strategy<Value = AllocationMsg> {
        (any::<u64>(), 0.0..500.0f64, 0.0..500.0f64, 0.1..60.0f64, 0.0..10.0f64, -1e4..1e4f64, 0.0..1e5f64).prop_map(
            |(id, coil, pass, dt, tol, exit, tex)| AllocationMsg {
                id: VehicleId(id),
                coil_power: coil,
                assigned_power: pass,
                interval: dt,
                tolerance: tol,
                exit_position: exit,
                time_to_exit: tex,
            },
        )
    }

    proptest! {
        #[test]
        fn report_codec_round_trips(r in report()) {
            let text = serde_json::to_string(&r).unwrap();
            prop_assert_eq!(serde_json::from_str::<VehicleReport>(&text).unwrap(), r);
        }

        #[test]
        fn allocation_codec_round_trips(m in allocation()) {
            let text = serde_json::to_string(&m).unwrap();
            prop_assert_eq!(serde_json::from_str::<AllocationMsg>(&text).unwrap(), m);
        }

        #[test]
        fn round_codec_round_trips(
            t in 0.0..1e5f64,
            reports in prop::collection::vec(report(), 0..5),
            allocations in prop::collection::vec(allocation(), 0..5),
            ms in 0.0..1e3f64,
        ) {
            let round = RoundLog { timestamp: t, reports, allocations, solve_ms: ms };
            let text = serde_json::to_string(&round).unwrap();
            prop_assert!(!text.contains('\n'));
            prop_assert_eq!(serde_json::from_str::<RoundLog>(&text).unwrap(), round);
        }
    }
}
