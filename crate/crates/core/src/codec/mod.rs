//! Toy codec assembly: model graph, entropy proxy, RD loss, training loop,
//! and the integer-datapath inference simulator.

pub mod entropy;
pub mod intsim;
pub mod model;
pub mod train;

pub use entropy::EntropyProxy;
pub use model::{
    build_model, Activation, EdgePolicy, EdgeQuant, EdgeRange, EvalForward, EvalOptions, Layer,
    LayerKind, Model, ModelConfig,
};
pub use train::{eval_rd_loss, eval_rd_point, train, NoHook, RDPoint, TrainHook, TrainOptions, TrainTrace};
