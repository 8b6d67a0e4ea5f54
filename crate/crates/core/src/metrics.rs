//! Evaluation quantities of a finished run: SoC fulfillment and its
//! distribution, utilization, and cumulative-energy trajectories.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{load_run, ExitRecord, RunResult};
use crate::types::{Strategy, VehicleId};

/// Histogram bin width for fulfillment densities.
pub const PDF_BIN_WIDTH: f64 = 0.05;
/// Vehicles staying less than this long are not ranked for trajectories, s.
pub const MIN_DWELL: f64 = 300.0;
/// Fulfillment at or above this counts as complete. It is the lower edge of
/// the top histogram bin: a vehicle that reached its target still drives
/// (and consumes) between the last stripe and its exit, so exact equality is
/// not observable.
pub const FULL_FULFILLMENT: f64 = 1.0 - PDF_BIN_WIDTH;

pub const FULFILLMENT_FILE: &str = "fulfillment.csv";
pub const CDF_FILE: &str = "cdf.csv";
pub const PDF_FILE: &str = "pdf.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub const FULFILLMENT_COLUMNS: [&str; 9] =
    ["run", "strategy", "id", "is_vut", "soc_init", "soc_target", "soc_exit", "energy_kwh", "phi"];
pub const CDF_COLUMNS: [&str; 5] = ["run", "strategy", "population", "phi", "cdf"];
pub const PDF_COLUMNS: [&str; 7] = ["run", "strategy", "population", "bin_lo", "bin_hi", "count", "density"];
pub const TRAJECTORY_COLUMNS: [&str; 8] =
    ["run", "strategy", "group", "rank", "id", "demand_kwh", "time", "energy_kwh"];

/// `sigma_exit / sigma_des`.
pub fn fulfillment(exit: &ExitRecord) -> f64 {
    debug_assert!(exit.soc_target > 0.0);
    exit.soc_exit / exit.soc_target
}

/// Empirical distribution of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    /// Sorted sample.
    pub sorted: Vec<f64>,
    /// `(x, F(x))` at every distinct sample value, increasing.
    pub cdf: Vec<(f64, f64)>,
    pub pdf: Vec<Bin>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `count / (n * width)`.
    pub density: f64,
}

impl Distribution {
    /// Distribution of `values` over `[0, 1]` with histogram bins of
    /// `bin_width`; the top bin is closed. An empty sample gives an empty
    /// distribution (see [`Distribution::is_empty`]).
    pub fn new(values: &[f64], bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0 && bin_width <= 1.0) {
            return Err(Error::Config(format!("bin width {bin_width} outside (0, 1]")));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Problem(format!("value {v} outside [0, 1]")));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut cdf: Vec<(f64, f64)> = Vec::new();
        for (i, &x) in sorted.iter().enumerate() {
            let f = (i + 1) as f64 / n as f64;
            match cdf.last_mut() {
                Some(last) if last.0 == x => last.1 = f,
                _ => cdf.push((x, f)),
            }
        }
        let bins = (1.0 / bin_width).round().max(1.0) as usize;
        let mut counts = vec![0usize; bins];
        for &x in &sorted {
            counts[((x / bin_width).floor() as usize).min(bins - 1)] += 1;
        }
        let pdf = counts
            .iter()
            .enumerate()
            .map(|(i, &count)| Bin {
                lo: i as f64 * bin_width,
                hi: ((i + 1) as f64 * bin_width).min(1.0),
                count,
                density: if n == 0 { 0.0 } else { count as f64 / (n as f64 * bin_width) },
            })
            .collect();
        Ok(Distribution { sorted, cdf, pdf })
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    /// `F(x) = #{v <= x} / n`; zero for an empty sample.
    pub fn cdf_at(&self, x: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        self.sorted.partition_point(|v| *v <= x) as f64 / self.sorted.len() as f64
    }

    /// Share of the sample strictly below `x`.
    pub fn fraction_below(&self, x: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        self.sorted.partition_point(|v| *v < x) as f64 / self.sorted.len() as f64
    }

    pub fn mean(&self) -> f64 {
        if self.sorted.is_empty() {
            return f64::NAN;
        }
        self.sorted.iter().sum::<f64>() / self.sorted.len() as f64
    }

    /// Linear-interpolation quantile, `q` in `[0, 1]`.
    pub fn quantile(&self, q: f64) -> f64 {
        let n = self.sorted.len();
        if n == 0 {
            return f64::NAN;
        }
        let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        self.sorted[lo] + (h - lo as f64) * (self.sorted[hi] - self.sorted[lo])
    }

    /// Largest distance between this empirical CDF and `reference`.
    pub fn ks_distance(&self, reference: impl Fn(f64) -> f64) -> f64 {
        let n = self.sorted.len() as f64;
        let mut worst = 0.0f64;
        for (i, &x) in self.sorted.iter().enumerate() {
            let f = reference(x);
            worst = worst.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
        }
        worst
    }
}

/// Dvoretzky-Kiefer-Wolfowitz band half-width: the empirical CDF of `n`
/// draws is within this distance of the true CDF everywhere with
/// probability at least `1 - alpha`.
pub fn dkw_epsilon(n: usize, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / (2.0 * n as f64)).sqrt()
}

/// Overlap coefficient of two histograms on the same bins: the area shared
/// by the two densities, 0 for disjoint samples and 1 for identical ones.
pub fn overlap_coefficient(a: &Distribution, b: &Distribution) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    debug_assert_eq!(a.pdf.len(), b.pdf.len());
    a.pdf.iter().zip(&b.pdf).map(|(x, y)| (x.count as f64 / a.len() as f64).min(y.count as f64 / b.len() as f64)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub below_half: f64,
    pub complete: f64,
}

impl Summary {
    pub fn of(d: &Distribution) -> Self {
        Summary {
            count: d.len(),
            mean: d.mean(),
            median: d.quantile(0.5),
            p10: d.quantile(0.1),
            p90: d.quantile(0.9),
            below_half: d.fraction_below(0.5),
            complete: 1.0 - d.fraction_below(FULL_FULFILLMENT),
        }
    }
}

/// Fulfillment of the measured vehicles of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct FulfillmentStats {
    /// `(exit record, phi)` in exit order.
    pub per_vehicle: Vec<(ExitRecord, f64)>,
    /// Ordinary vehicles.
    pub regular: Distribution,
    pub vut: Distribution,
}

impl FulfillmentStats {
    pub fn of(run: &RunResult) -> Result<Self> {
        let per_vehicle: Vec<(ExitRecord, f64)> = run.measured_exits().map(|e| (e.clone(), fulfillment(e))).collect();
        let pick =
            |vut: bool| -> Vec<f64> { per_vehicle.iter().filter(|(e, _)| e.is_vut == vut).map(|(_, p)| *p).collect() };
        Ok(FulfillmentStats {
            regular: Distribution::new(&pick(false), PDF_BIN_WIDTH)?,
            vut: Distribution::new(&pick(true), PDF_BIN_WIDTH)?,
            per_vehicle,
        })
    }
}

/// Cumulative grid-side energy of one vehicle over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: VehicleId,
    /// `(sigma_des - sigma_init) * E`, kWh.
    pub demand_kwh: f64,
    /// `(time, kWh)`, time increasing.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    /// Highest demand first.
    pub high: Vec<Trajectory>,
    /// Lowest demand first.
    pub low: Vec<Trajectory>,
    /// Set when fewer vehicles qualified than were asked for.
    pub short: bool,
}

fn demand_kwh(e: &ExitRecord) -> f64 {
    (e.soc_target - e.soc_init) * e.capacity_kwh
}

fn trajectories_of(run: &RunResult, ids: &[&ExitRecord]) -> Vec<Trajectory> {
    let mut by_id: BTreeMap<VehicleId, Vec<(f64, f64)>> = ids.iter().map(|e| (e.id, Vec::new())).collect();
    for s in &run.samples {
        if let Some(points) = by_id.get_mut(&s.id) {
            points.push((s.time, s.energy_kwh));
        }
    }
    ids.iter().map(|e| Trajectory { id: e.id, demand_kwh: demand_kwh(e), points: by_id[&e.id].clone() }).collect()
}

/// The `n_high` highest-demand and `n_low` lowest-demand measured ordinary
/// vehicles that stayed at least [`MIN_DWELL`] on the corridor.
pub fn trajectory_extract(run: &RunResult, n_high: usize, n_low: usize) -> TrajectorySet {
    let mut ranked: Vec<&ExitRecord> =
        run.measured_exits().filter(|e| !e.is_vut && e.exit_time - e.entry_time >= MIN_DWELL).collect();
    ranked.sort_by(|a, b| demand_kwh(b).total_cmp(&demand_kwh(a)).then(a.id.cmp(&b.id)));
    let high: Vec<&ExitRecord> = ranked.iter().take(n_high).copied().collect();
    let low: Vec<&ExitRecord> = ranked.iter().rev().take(n_low).copied().collect();
    TrajectorySet {
        short: ranked.len() < n_high.max(n_low),
        high: trajectories_of(run, &high),
        low: trajectories_of(run, &low),
    }
}

/// The first `n` measured vehicles under test, in entry order.
pub fn vut_trajectories(run: &RunResult, n: usize) -> Vec<Trajectory> {
    let mut vuts: Vec<&ExitRecord> = run.measured_exits().filter(|e| e.is_vut).collect();
    vuts.sort_by(|a, b| a.entry_time.total_cmp(&b.entry_time).then(a.id.cmp(&b.id)));
    vuts.truncate(n);
    trajectories_of(run, &vuts)
}

/// Power figures over the measurement window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSummary {
    pub mean_requested_kw: f64,
    pub mean_delivered_kw: f64,
    /// Delivered over requested, time-averaged.
    pub delivered_ratio: f64,
    /// Delivered over the total budget.
    pub utilization: f64,
}

impl PowerSummary {
    pub fn of(run: &RunResult) -> Self {
        let s = run.summary();
        PowerSummary {
            mean_requested_kw: s.mean_requested_kw,
            mean_delivered_kw: s.mean_delivered_kw,
            delivered_ratio: if s.mean_requested_kw > 0.0 { s.mean_delivered_kw / s.mean_requested_kw } else { 1.0 },
            utilization: s.utilization,
        }
    }
}

/// Everything `summary.json` holds for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub strategy: Strategy,
    pub seed: u64,
    pub lambda_vpm: f64,
    pub vut_period: Option<f64>,
    pub power: PowerSummary,
    pub fulfillment: Summary,
    pub vut_fulfillment: Summary,
    /// Set when fewer vehicles than asked qualified for trajectories.
    pub trajectories_short: bool,
}

/// Vehicles per group written to `trajectories.csv`.
pub const TRAJECTORY_COUNT: usize = 3;

fn label_of(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Reads the run directories and writes the report files into `out`.
/// Each run is labelled by its directory name.
pub fn report(dirs: &[&Path], out: &Path) -> Result<BTreeMap<String, RunMetrics>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut fulfillment_w = csv::Writer::from_path(out.join(FULFILLMENT_FILE))?;
    let mut cdf_w = csv::Writer::from_path(out.join(CDF_FILE))?;
    let mut pdf_w = csv::Writer::from_path(out.join(PDF_FILE))?;
    let mut traj_w = csv::Writer::from_path(out.join(TRAJECTORIES_FILE))?;
    fulfillment_w.write_record(FULFILLMENT_COLUMNS)?;
    cdf_w.write_record(CDF_COLUMNS)?;
    pdf_w.write_record(PDF_COLUMNS)?;
    traj_w.write_record(TRAJECTORY_COLUMNS)?;

    let mut summary = BTreeMap::new();
    for dir in dirs {
        let label = label_of(dir);
        if summary.contains_key(&label) {
            return Err(Error::Config(format!("two run directories are named '{label}'")));
        }
        let run = load_run(dir)?;
        let strategy = run.strategy().to_string();
        let stats = FulfillmentStats::of(&run)?;
        for (e, phi) in &stats.per_vehicle {
            fulfillment_w.write_record([
                label.clone(),
                strategy.clone(),
                e.id.0.to_string(),
                e.is_vut.to_string(),
                e.soc_init.to_string(),
                e.soc_target.to_string(),
                e.soc_exit.to_string(),
                e.energy_kwh.to_string(),
                phi.to_string(),
            ])?;
        }
        for (population, d) in [("regular", &stats.regular), ("vut", &stats.vut)] {
            for (x, f) in &d.cdf {
                cdf_w.write_record([
                    label.clone(),
                    strategy.clone(),
                    population.into(),
                    x.to_string(),
                    f.to_string(),
                ])?;
            }
            if d.is_empty() {
                continue;
            }
            for b in &d.pdf {
                pdf_w.write_record([
                    label.clone(),
                    strategy.clone(),
                    population.into(),
                    b.lo.to_string(),
                    b.hi.to_string(),
                    b.count.to_string(),
                    b.density.to_string(),
                ])?;
            }
        }
        let set = trajectory_extract(&run, TRAJECTORY_COUNT, TRAJECTORY_COUNT);
        let vut = vut_trajectories(&run, TRAJECTORY_COUNT);
        for (group, list) in [("high", &set.high), ("low", &set.low), ("vut", &vut)] {
            for (rank, t) in list.iter().enumerate() {
                for (time, kwh) in &t.points {
                    traj_w.write_record([
                        label.clone(),
                        strategy.clone(),
                        group.into(),
                        (rank + 1).to_string(),
                        t.id.0.to_string(),
                        t.demand_kwh.to_string(),
                        time.to_string(),
                        kwh.to_string(),
                    ])?;
                }
            }
        }
        summary.insert(
            label,
            RunMetrics {
                strategy: run.strategy(),
                seed: run.seed(),
                lambda_vpm: run.scenario.demand.lambda_vpm,
                vut_period: run.scenario.demand.vut_period,
                power: PowerSummary::of(&run),
                fulfillment: Summary::of(&stats.regular),
                vut_fulfillment: Summary::of(&stats.vut),
                trajectories_short: set.short,
            },
        );
    }
    for (w, name) in [
        (&mut fulfillment_w, FULFILLMENT_FILE),
        (&mut cdf_w, CDF_FILE),
        (&mut pdf_w, PDF_FILE),
        (&mut traj_w, TRAJECTORIES_FILE),
    ] {
        w.flush().map_err(|e| Error::io(out.join(name), e))?;
    }
    let path = out.join(SUMMARY_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &summary)?;
    w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
