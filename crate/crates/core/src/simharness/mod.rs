//! Replicated simulation: a synthetic register with a perturbed copy,
//! repeated samples linked back to the register, and the estimators compared
//! on coefficients and area predictions.

mod population;
mod replicate;
mod report;

pub use population::{
    generate_population, CovariateSpec, KeyFieldSpec, Population, PopulationSpec, RegressionTruth, COVARIATE_NAME,
    DEFAULT_DOMAIN_SIZES, DOMAIN_PREFIX, RESPONSE_NAME,
};
pub use replicate::{
    run_on_population, run_replications, run_single, BayesBudget, Estimator, RepOutcome, SimulationConfig,
};
pub use report::{compute_arb, AreaRow, CoefRow, LinkageRow, ReplicationReport};
