use oopsim::contract::CostSharingContract;
use oopsim::estimation::{estimate, EstimationConfig, GridAxis, ObservedData};
use oopsim::shocks::{default_cells, DEFAULT_BASE_MOMENTS};
use oopsim::simulator::population::{default_omega_log_mean, DEFAULT_OMEGA_LOG_SD};
use oopsim::simulator::{generate_population, simulate_panel, BillDelayDistribution, PopulationConfig, SimParams, SimulationSetup};

fn observed(households: usize, beta: f64, sigma_s: f64, seed: u64) -> (ObservedData, BillDelayDistribution) {
    let cfg = PopulationConfig {
        households,
        mean_household_size: 2.5,
        max_household_size: 5,
        cells: default_cells(DEFAULT_BASE_MOMENTS).unwrap(),
        contract_menu: vec![(CostSharingContract::new(1000.0, 0.2, 3000.0).unwrap(), 1.0)],
        omega_log_mean: default_omega_log_mean(),
        omega_log_sd: DEFAULT_OMEGA_LOG_SD,
    };
    let pop = generate_population(&cfg, seed).unwrap();
    let delays = BillDelayDistribution::default_geometric();
    let setup = SimulationSetup { population: &pop, delays: &delays, years: 1 };
    let out = simulate_panel(&setup, &SimParams::static_model(beta, sigma_s), seed + 1000, 0).unwrap();
    (
        ObservedData {
            population: pop,
            records: out.records,
            claims: Some(out.claims),
        },
        delays,
    )
}

fn beta_only(beta: GridAxis, replicates: usize, draws: usize, seed: u64) -> EstimationConfig {
    EstimationConfig {
        grid: vec![beta, GridAxis::fixed(15.2)],
        n_replicates: replicates,
        bootstrap_draws: draws,
        seed,
        ..EstimationConfig::static_default()
    }
}

/// Twenty independent synthetic experiments. Conditioning on the observed
/// claim history leaves a small downward bias in beta when signals are noisy,
/// so coverage sits a little below nominal; 16 of 20 is the floor asserted.
#[test]
fn bootstrap_interval_coverage() {
    let mut covered = 0;
    for e in 0..20 {
        let (data, delays) = observed(400, 1.73, 15.2, 100 + e);
        let cfg = beta_only(GridAxis::new(1.0, 2.5, 0.05, Some(0.01)), 30, 50, 7 + e);
        let ci = estimate(&data, &cfg, &delays).unwrap().ci_95["beta"];
        if ci.lower <= 1.73 && 1.73 <= ci.upper {
            covered += 1;
        }
    }
    assert!(covered >= 16, "covered {covered}/20");
}

#[test]
fn wider_grid_does_not_shrink_interval() {
    let (data, delays) = observed(400, 1.73, 15.2, 5);
    let narrow = estimate(&data, &beta_only(GridAxis::new(1.4, 2.1, 0.05, Some(0.01)), 10, 50, 3), &delays).unwrap();
    let wide = estimate(&data, &beta_only(GridAxis::new(0.5, 3.0, 0.05, Some(0.01)), 10, 50, 3), &delays).unwrap();
    let (n, w) = (narrow.ci_95["beta"], wide.ci_95["beta"]);
    assert!(w.upper - w.lower >= n.upper - n.lower - 1e-12, "{n:?} {w:?}");
}

#[test]
fn true_parameters_beat_displaced_beta() {
    let (data, delays) = observed(600, 1.73, 15.2, 9);
    let cfg = beta_only(GridAxis::fixed(1.73), 20, 0, 1);
    let at = |b: f64| {
        let mut c = cfg.clone();
        c.grid[0] = GridAxis::fixed(b);
        estimate(&data, &c, &delays).unwrap().best_objective
    };
    let truth = at(1.73);
    assert!(truth < at(1.23));
    assert!(truth < at(2.23));
}
