//! Corridor topology, stripe layout, traffic demand and run parameters.
//!
//! Everything here is immutable once a [`Scenario`] has been built and
//! validated; the rest of the crate only reads it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::energy::ConsumptionModel;
use crate::error::{Error, Result};
use crate::mpc::MpcConfig;
use crate::qp::SolverSettings;
use crate::types::{Direction, Strategy, StripeId};

/// Number of entry/exit points along the corridor.
pub const NODE_COUNT: usize = 5;

/// Fraction-of-lambda traffic relations between the five entry/exit points.
/// Row = entry, column = exit. Terminal-to-terminal relations carry most of
/// the traffic and there is no traffic between inner intersections.
pub const DEFAULT_RELATIONS: [[f64; NODE_COUNT]; NODE_COUNT] = [
    [0.0, 0.125, 0.125, 0.25, 0.5],
    [0.125, 0.0, 0.0, 0.0, 0.125],
    [0.125, 0.0, 0.0, 0.0, 0.125],
    [0.25, 0.0, 0.0, 0.0, 0.25],
    [0.5, 0.125, 0.125, 0.25, 0.0],
];

/// Default stripe lengths per direction, in meters.
pub const DEFAULT_STRIPE_LENGTHS: [f64; 5] = [628.0, 900.0, 1100.0, 1276.0, 1000.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorridorSpec {
    pub length: f64,
    pub directions: usize,
    pub lanes_per_direction: usize,
    /// Positions of entry/exit points 1..5, in meters.
    pub node_positions: Vec<f64>,
    /// m/s
    pub free_flow_speed: f64,
    /// Average longitudinal road occupancy of a vehicle (length plus gap), m.
    pub jam_spacing: f64,
    /// Width of the window used to measure local density, m.
    pub density_window: f64,
}

impl Default for CorridorSpec {
    fn default() -> Self {
        CorridorSpec {
            length: 9650.0,
            directions: 2,
            lanes_per_direction: 2,
            node_positions: vec![0.0, 2400.0, 4800.0, 7200.0, 9650.0],
            free_flow_speed: 11.1,
            jam_spacing: 10.0,
            density_window: 200.0,
        }
    }
}

impl CorridorSpec {
    /// Position of a 1-based entry/exit point.
    pub fn node_position(&self, node: usize) -> f64 {
        self.node_positions[node - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0) {
            return Err(Error::Config("corridor length must be positive".into()));
        }
        if self.directions != 2 {
            return Err(Error::Config("corridor must have exactly two directions".into()));
        }
        if self.lanes_per_direction == 0 {
            return Err(Error::Config("lanes_per_direction must be at least 1".into()));
        }
        if self.node_positions.len() != NODE_COUNT {
            return Err(Error::Config(format!(
                "expected {NODE_COUNT} node positions, got {}",
                self.node_positions.len()
            )));
        }
        if self.node_positions[0] != 0.0 || self.node_positions[NODE_COUNT - 1] != self.length {
            return Err(Error::Config("first node must be at 0 and last node at the corridor length".into()));
        }
        if self.node_positions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("node positions must be strictly increasing".into()));
        }
        if !(self.free_flow_speed > 0.0) || !(self.jam_spacing > 0.0) || !(self.density_window > 0.0) {
            return Err(Error::Config("free_flow_speed, jam_spacing and density_window must be positive".into()));
        }
        Ok(())
    }
}

/// A contiguous chargeable road segment sharing one power feed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripeSpec {
    pub id: StripeId,
    pub direction: Direction,
    pub start_pos: f64,
    pub end_pos: f64,
    /// Distance between coil centers, m.
    pub coil_spacing: f64,
    /// Nominal power per coil, kW.
    pub coil_power_nom: f64,
    pub efficiency: f64,
    /// Minimum power always assigned to the stripe, kW.
    pub p_min: f64,
    /// Share of the total budget assigned without power management, kW.
    pub static_share: f64,
}

impl StripeSpec {
    pub fn length(&self) -> f64 {
        self.end_pos - self.start_pos
    }

    /// Closed interval containment on the stripe's own carriageway.
    pub fn contains(&self, direction: Direction, position: f64) -> bool {
        self.direction == direction && self.start_pos <= position && position <= self.end_pos
    }
}

/// Upper bound on the power a stripe could deliver if every coil of both
/// lanes were coupled at once.
pub fn deliverable_power(stripe: &StripeSpec) -> f64 {
    let coils = (stripe.length() / stripe.coil_spacing).floor().max(0.0);
    2.0 * coils * stripe.efficiency * stripe.coil_power_nom
}

/// Stripe placement, mirrored on both carriageways.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StripeLayout {
    /// `[start, end]` in corridor coordinates, one entry per stripe.
    pub intervals: Vec<[f64; 2]>,
    pub coil_spacing: f64,
    pub coil_power_nom: f64,
    pub efficiency: f64,
    pub p_min: f64,
}

impl Default for StripeLayout {
    fn default() -> Self {
        // One stripe pair between nodes 1 and 2, one stripe in each other gap.
        StripeLayout {
            intervals: vec![[300.0, 928.0], [1300.0, 2200.0], [3050.0, 4150.0], [5362.0, 6638.0], [7925.0, 8925.0]],
            coil_spacing: 1.0,
            coil_power_nom: 100.0,
            efficiency: 0.95,
            p_min: 1.0,
        }
    }
}

impl StripeLayout {
    /// Builds the stripes of both directions (forward first) and splits the
    /// total budget across them in proportion to their length.
    pub fn build(&self, total_power: f64) -> Vec<StripeSpec> {
        let mut stripes = Vec::with_capacity(2 * self.intervals.len());
        for direction in [Direction::Forward, Direction::Backward] {
            for [start, end] in &self.intervals {
                stripes.push(StripeSpec {
                    id: StripeId(stripes.len()),
                    direction,
                    start_pos: *start,
                    end_pos: *end,
                    coil_spacing: self.coil_spacing,
                    coil_power_nom: self.coil_power_nom,
                    efficiency: self.efficiency,
                    p_min: self.p_min,
                    static_share: 0.0,
                });
            }
        }
        let lengths: Vec<f64> = stripes.iter().map(StripeSpec::length).collect();
        for (stripe, share) in stripes.iter_mut().zip(proportional_split(total_power, &lengths)) {
            stripe.static_share = share;
        }
        stripes
    }
}

/// Splits `total` proportionally to `weights`. When `total` is a whole
/// number of kW the parts are whole kW and sum to `total` exactly, using the
/// largest-remainder method (ties go to the lower index).
pub fn proportional_split(total: f64, weights: &[f64]) -> Vec<f64> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0.0; weights.len()];
    }
    let raw: Vec<f64> = weights.iter().map(|w| total * w / sum).collect();
    if total.fract() != 0.0 || total < 0.0 {
        return raw;
    }
    let mut parts: Vec<f64> = raw.iter().map(|r| r.floor()).collect();
    let assigned: f64 = parts.iter().sum();
    let mut leftover = (total - assigned).round() as usize;
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - parts[a];
        let fb = raw[b] - parts[b];
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        parts[i] += 1.0;
        leftover -= 1;
    }
    parts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficDemand {
    /// Vehicles per minute.
    pub lambda_vpm: f64,
    /// Fractions of lambda per (entry, exit) pair.
    pub relation_matrix: [[f64; NODE_COUNT]; NODE_COUNT],
    /// Period of the vehicles-under-test injection, s. `None` disables VUTs.
    pub vut_period: Option<f64>,
    pub seed: u64,
}

impl Default for TrafficDemand {
    fn default() -> Self {
        TrafficDemand { lambda_vpm: 12.0, relation_matrix: DEFAULT_RELATIONS, vut_period: None, seed: 1 }
    }
}

impl TrafficDemand {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_vpm >= 0.0) {
            return Err(Error::Config("lambda_vpm must be non-negative".into()));
        }
        for (i, row) in self.relation_matrix.iter().enumerate() {
            if row[i] != 0.0 {
                return Err(Error::Config(format!("relation {}->{} must be zero", i + 1, i + 1)));
            }
            if row.iter().any(|f| !(*f >= 0.0)) {
                return Err(Error::Config("relation fractions must be non-negative".into()));
            }
        }
        if let Some(p) = self.vut_period {
            if !(p > 0.0) {
                return Err(Error::Config("vut_period must be positive".into()));
            }
        }
        Ok(())
    }

    /// Arrival rate of an (entry, exit) pair in vehicles per second.
    pub fn pair_rate(&self, entry: usize, exit: usize) -> f64 {
        self.relation_matrix[entry - 1][exit - 1] * self.lambda_vpm / 60.0
    }
}

/// One vehicle insertion at an entry point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub time: f64,
    /// 1-based entry point.
    pub entry: usize,
    /// 1-based exit point.
    pub exit: usize,
    pub is_vut: bool,
}

/// Poisson arrivals for every origin-destination pair plus the periodic
/// vehicles under test, sorted by time.
///
/// Each pair draws from its own ChaCha stream so that changing one rate
/// never perturbs the others.
pub fn generate_arrivals(demand: &TrafficDemand, t0: f64, t1: f64) -> Result<Vec<Arrival>> {
    if !(t1 > t0) {
        return Err(Error::Window { t0, t1 });
    }
    let mut out = Vec::new();
    for entry in 1..=NODE_COUNT {
        for exit in 1..=NODE_COUNT {
            let rate = demand.pair_rate(entry, exit);
            if rate <= 0.0 || entry == exit {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(demand.seed);
            rng.set_stream(((entry - 1) * NODE_COUNT + (exit - 1)) as u64);
            let gap = Exp::new(rate).expect("positive rate");
            let mut t = t0 + gap.sample(&mut rng);
            while t < t1 {
                out.push(Arrival { time: t, entry, exit, is_vut: false });
                t += gap.sample(&mut rng);
            }
        }
    }
    if let Some(period) = demand.vut_period {
        let mut k = 0u64;
        loop {
            let t = t0 + k as f64 * period;
            if t >= t1 {
                break;
            }
            let (entry, exit) = if k % 2 == 0 { (1, NODE_COUNT) } else { (NODE_COUNT, 1) };
            out.push(Arrival { time: t, entry, exit, is_vut: true });
            k += 1;
        }
    }
    out.sort_by(|a, b| {
        a.time.total_cmp(&b.time).then(a.entry.cmp(&b.entry)).then(a.exit.cmp(&b.exit)).then(a.is_vut.cmp(&b.is_vut))
    });
    Ok(out)
}

/// Battery state and charging contract drawn for a newly inserted vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleProfile {
    pub soc_init: f64,
    pub soc_target: f64,
    pub capacity_kwh: f64,
    pub p_on: f64,
}

/// Draws one profile per arrival, in arrival order, from a stream that is
/// independent of the arrival process.
pub fn draw_profiles(arrivals: &[Arrival], sim: &SimConfig, seed: u64) -> Vec<VehicleProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 32);
    let draw = |rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]| {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };
    arrivals
        .iter()
        .map(|a| {
            // Always consume the same number of draws so VUT placement does
            // not shift the profiles of ordinary vehicles.
            let soc_init = draw(&mut rng, sim.init_soc_range);
            let soc_target = draw(&mut rng, sim.target_soc_range);
            let capacity_kwh = draw(&mut rng, sim.battery_capacity_range);
            if a.is_vut {
                VehicleProfile {
                    soc_init: sim.vut_soc_init,
                    soc_target: sim.vut_soc_target,
                    capacity_kwh,
                    p_on: sim.p_on,
                }
            } else {
                VehicleProfile { soc_init, soc_target, capacity_kwh, p_on: sim.p_on }
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Mobility step, s.
    pub tick: f64,
    /// Control interval, s.
    pub control_interval: f64,
    pub warmup: f64,
    pub measure: f64,
    /// Total DIC power budget, kW.
    pub total_power: f64,
    pub strategy: Strategy,
    pub mpc: MpcConfig,
    pub solver: SolverSettings,
    pub init_soc_range: [f64; 2],
    pub target_soc_range: [f64; 2],
    /// kWh
    pub battery_capacity_range: [f64; 2],
    /// Maximum power absorbable by a vehicle pad, kW.
    pub p_on: f64,
    /// Time constant of the uncoordinated request, s.
    pub charge_time_constant: f64,
    pub consumption: ConsumptionModel,
    /// Window over which the mean speed used for prediction is taken, s.
    pub avg_speed_window: f64,
    pub vut_soc_init: f64,
    pub vut_soc_target: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            tick: 1.0,
            control_interval: 5.0,
            warmup: 900.0,
            measure: 3600.0,
            total_power: 16_000.0,
            strategy: Strategy::Mpc,
            mpc: MpcConfig::default(),
            solver: SolverSettings::default(),
            init_soc_range: [0.1, 0.5],
            target_soc_range: [0.5, 1.0],
            battery_capacity_range: [40.0, 80.0],
            p_on: 150.0,
            charge_time_constant: 300.0,
            consumption: ConsumptionModel::default(),
            avg_speed_window: 60.0,
            vut_soc_init: 0.02,
            vut_soc_target: 1.0,
        }
    }
}

impl SimConfig {
    /// Number of mobility ticks per control interval.
    pub fn ticks_per_interval(&self) -> usize {
        (self.control_interval / self.tick).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tick > 0.0) || !(self.control_interval > 0.0) {
            return Err(Error::Config("tick and control_interval must be positive".into()));
        }
        let ratio = self.control_interval / self.tick;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(Error::Config("control_interval must be an integer multiple of tick".into()));
        }
        if !(self.warmup >= 0.0) || !(self.measure >= 0.0) || !(self.warmup + self.measure > 0.0) {
            return Err(Error::Config("warmup + measure must be positive".into()));
        }
        if !(self.total_power > 0.0) {
            return Err(Error::Config("total_power must be positive".into()));
        }
        for (name, [lo, hi]) in [("init_soc_range", self.init_soc_range), ("target_soc_range", self.target_soc_range)] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("{name} must satisfy 0 <= lo <= hi <= 1")));
            }
        }
        if !(self.target_soc_range[0] > 0.0) {
            return Err(Error::Config("target SoC must be positive".into()));
        }
        let [clo, chi] = self.battery_capacity_range;
        if !(clo > 0.0 && clo <= chi) {
            return Err(Error::Config("battery_capacity_range must be positive and ordered".into()));
        }
        if !(self.p_on > 0.0) || !(self.charge_time_constant > 0.0) {
            return Err(Error::Config("p_on and charge_time_constant must be positive".into()));
        }
        if !(0.0 < self.vut_soc_init && self.vut_soc_init <= self.vut_soc_target) || self.vut_soc_target > 1.0 {
            return Err(Error::Config("VUT SoC values must satisfy 0 < init <= target <= 1".into()));
        }
        if !(self.avg_speed_window >= 0.0) {
            return Err(Error::Config("avg_speed_window must be non-negative".into()));
        }
        self.consumption.validate()?;
        self.mpc.validate()?;
        if (self.mpc.delta_t - self.control_interval).abs() > 1e-9 {
            return Err(Error::Config("mpc.delta_t must equal control_interval".into()));
        }
        Ok(())
    }
}

/// A fully built, validated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub corridor: CorridorSpec,
    pub stripes: Vec<StripeSpec>,
    pub demand: TrafficDemand,
    pub sim: SimConfig,
}

/// On-disk scenario description. Every field is optional and falls back to
/// the default scenario.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub corridor: CorridorSpec,
    pub stripes: StripeLayout,
    pub demand: TrafficDemand,
    pub sim: SimConfig,
}

impl ScenarioConfig {
    /// Parses TOML (`key = value` tables) or, if the text starts with `{`, JSON.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: e.line(),
                msg: e.to_string(),
            })
        } else {
            toml::from_str(text).map_err(|e| {
                let line =
                    e.span().map(|span| text[..span.start.min(text.len())].matches('\n').count() + 1).unwrap_or(0);
                Error::Parse { path: origin.to_string(), line, msg: e.message().to_string() }
            })
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn build(&self) -> Result<Scenario> {
        let scenario = Scenario {
            corridor: self.corridor.clone(),
            stripes: self.stripes.build(self.sim.total_power),
            demand: self.demand.clone(),
            sim: self.sim.clone(),
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

/// The default corridor: 10 stripes, 16 MW budget, 5 s control interval.
pub fn build_default_scenario() -> (CorridorSpec, Vec<StripeSpec>, TrafficDemand, SimConfig) {
    let s = ScenarioConfig::default().build().expect("default scenario is valid");
    (s.corridor, s.stripes, s.demand, s.sim)
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.corridor.validate()?;
        self.demand.validate()?;
        self.sim.validate()?;
        validate_stripes(&self.corridor, &self.stripes)?;
        let deliverable: f64 = self.stripes.iter().map(deliverable_power).sum();
        if self.sim.total_power >= deliverable {
            return Err(Error::Config(format!(
                "total_power {} kW must be below the sum of deliverable stripe power {deliverable} kW",
                self.sim.total_power
            )));
        }
        for s in &self.stripes {
            if s.p_min > s.static_share {
                return Err(Error::Config(format!("stripe {} minimum power exceeds its static share", s.id)));
            }
        }
        Ok(())
    }

    pub fn stripe(&self, id: StripeId) -> &StripeSpec {
        &self.stripes[id.0]
    }
}

/// Geometry checks: stripes inside the corridor, no stripe overlapping a node,
/// and no two stripes of one direction overlapping.
pub fn validate_stripes(corridor: &CorridorSpec, stripes: &[StripeSpec]) -> Result<()> {
    for (i, s) in stripes.iter().enumerate() {
        if s.id != StripeId(i) {
            return Err(Error::Config(format!("stripe ids must be 0..n in order (found {} at {i})", s.id)));
        }
        if !(s.end_pos > s.start_pos) {
            return Err(Error::Config(format!("stripe {} has non-positive length", s.id)));
        }
        if s.start_pos < 0.0 || s.end_pos > corridor.length {
            return Err(Error::Config(format!("stripe {} lies outside the corridor", s.id)));
        }
        if !(s.efficiency > 0.0 && s.efficiency <= 1.0) {
            return Err(Error::Config(format!("stripe {} efficiency must be in (0, 1]", s.id)));
        }
        if !(s.p_min > 0.0) || !(s.coil_spacing > 0.0) || !(s.coil_power_nom > 0.0) {
            return Err(Error::Config(format!(
                "stripe {} needs positive p_min, coil_spacing and coil_power_nom",
                s.id
            )));
        }
        if s.static_share >= deliverable_power(s) {
            return Err(Error::Config(format!("stripe {} static share exceeds its deliverable power", s.id)));
        }
        if corridor.node_positions.iter().any(|&n| s.start_pos <= n && n <= s.end_pos) {
            return Err(Error::Config(format!("stripe {} overlaps an entry/exit point", s.id)));
        }
    }
    for a in stripes {
        for b in stripes {
            if a.id < b.id && a.direction == b.direction && a.start_pos <= b.end_pos && b.start_pos <= a.end_pos {
                return Err(Error::Config(format!("stripes {} and {} overlap", a.id, b.id)));
            }
        }
    }
    Ok(())
}
