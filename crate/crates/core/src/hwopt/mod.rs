//! Hardware-aware optimization: progressive mixed-precision search, the
//! equivalent-bit-width budget metric, GDN slimming with channel pruning,
//! and FLOPs accounting.

pub mod flops;
pub mod plan;
pub mod search;
pub mod slim;

pub use flops::{flops_count, FlopsReport};
pub use plan::{
    equivalent_bitwidth, equivalent_bitwidth_exact, footprint_from_graph, BitWidthPlan,
    FootprintMode, FootprintModel,
};
pub use search::{
    progressive_search, sensitivity_rank, ModelPlanEvaluator, PlanEvaluator, SearchOrder,
    SearchStep,
};
pub use slim::{prune, slim_train, PruneReport, SlimTrainOutput};
