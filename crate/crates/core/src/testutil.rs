use crate::contract::CostSharingContract;
use crate::shocks::{default_cells, DEFAULT_BASE_MOMENTS};
use crate::simulator::population::{default_omega_log_mean, DEFAULT_OMEGA_LOG_SD};
use crate::simulator::{generate_population, BillDelayDistribution, Population, PopulationConfig};

pub fn population_config(households: usize) -> PopulationConfig {
    PopulationConfig {
        households,
        mean_household_size: 2.5,
        max_household_size: 5,
        cells: default_cells(DEFAULT_BASE_MOMENTS).unwrap(),
        contract_menu: vec![
            (CostSharingContract::new(1000.0, 0.2, 3000.0).unwrap(), 1.0),
            (CostSharingContract::new(2000.0, 0.2, 5000.0).unwrap(), 1.0),
        ],
        omega_log_mean: default_omega_log_mean(),
        omega_log_sd: DEFAULT_OMEGA_LOG_SD,
    }
}

pub fn population(households: usize, seed: u64) -> (Population, BillDelayDistribution) {
    (
        generate_population(&population_config(households), seed).unwrap(),
        BillDelayDistribution::default_geometric(),
    )
}
