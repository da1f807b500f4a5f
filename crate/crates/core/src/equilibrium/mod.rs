//! The learning engine: model sets, scenario utilities, gradient estimation
//! and Nash gradient play, plus the wake-sleep and ELBO baselines.

mod data;
mod estimate;
mod models;
mod plan;
mod scenario;
mod trainer;

pub use data::{Batch, BatchCursor, EmpiricalData, Stream};
pub use estimate::{estimate_gradients, estimate_player, PlayerEstimate, RngStreams};
pub use models::{Assignment, Block, Factor, FactorKind, ModelSet, ParamBlock, Use, Var};
pub use plan::{hierarchical_plans, scenario_plans, utility_terms, Draw, PlayerPlan, Term};
pub use scenario::{build_models, Architecture, PriorKind, Scenario, ScenarioOptions, Variant};
pub use trainer::{
    train, Algorithm, Evaluation, GradientSource, MetricRow, MetricsLog, TrainConfig, TrainerState, UpdateMode,
    METRICS_HEADER,
};

pub(crate) use estimate::{bind_record, PlayerTotals, TermSums};

/// Factor names used by the built-in scenarios.
pub mod factor_names {
    pub use super::scenario::names::*;
}
