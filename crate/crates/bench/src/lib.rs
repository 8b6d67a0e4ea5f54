//! Deterministic workloads shared by the benches.

use dic_core::benchmark::BenchmarkDemand;
use dic_core::mobility::OccupancyPrediction;
use dic_core::mpc::{MpcConfig, MpcInstance, MpcVehicle};
use dic_core::scenario::build_default_scenario;
use dic_core::types::{StripeId, VehicleId};

/// Spreads `i` over `[0, 1)` without a random generator.
fn spread(i: usize, salt: usize) -> f64 {
    ((i * 7919 + salt * 104_729) % 1000) as f64 / 1000.0
}

/// `n` vehicles on the default corridor, each on some stripe for part of the
/// horizon, with SoC gaps of varying size.
pub fn corridor_instance(n: usize) -> MpcInstance {
    let (_, stripes, _, sim) = build_default_scenario();
    let config = MpcConfig::default();
    let k = config.horizon;
    let vehicles = (0..n)
        .map(|i| {
            let stripe = StripeId(i % stripes.len());
            let leave = 1 + i % k;
            let steps = (0..k).map(|s| (s < leave).then_some(stripe)).collect();
            let coverage = (0..k).map(|s| if s < leave { 1.0 } else { 0.0 }).collect();
            let soc = 0.1 + 0.4 * spread(i, 1);
            MpcVehicle {
                id: VehicleId(i as u64),
                soc,
                soc_target: (soc + 0.2 + 0.4 * spread(i, 2)).min(1.0),
                capacity_kwh: 40.0 + 40.0 * spread(i, 3),
                p_on: 150.0,
                prediction: OccupancyPrediction {
                    vehicle: VehicleId(i as u64),
                    steps,
                    coverage,
                    tau: 100.0 + 800.0 * spread(i, 4),
                },
                consumption: vec![0.014; k],
            }
        })
        .collect();
    MpcInstance { time: 0.0, vehicles, stripes, total_power: sim.total_power, config }
}

/// `n` requests spread over the stripes of the default corridor, a tenth of
/// them off-stripe.
pub fn benchmark_demands(n: usize) -> Vec<BenchmarkDemand> {
    let (_, stripes, _, _) = build_default_scenario();
    (0..n)
        .map(|i| BenchmarkDemand {
            id: VehicleId(i as u64),
            stripe: (i % 10 != 9).then_some(StripeId(i % stripes.len())),
            request: 150.0 * spread(i, 5),
            cap: 100.0,
        })
        .collect()
}
