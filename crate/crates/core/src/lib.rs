//! Adaptive tensor tree Born machine.
//!
//! A generative model over binary variables whose probability is the squared
//! amplitude of a wave function represented by a loop-free tensor network.
//! Tensor elements are trained by gradient descent on the negative
//! log-likelihood, and the tree structure itself is rewired during training
//! to minimize the mutual information flowing across each bond.

pub mod batch;
pub mod bmi;
pub mod data;
pub mod error;
pub mod grad;
pub mod io;
pub mod model;
pub mod sample;
pub mod tensor;
pub mod topology;
pub mod train;

pub use batch::DataBatch;
pub use bmi::{bmi_empirical, bmi_exact};
pub use error::Error;
pub use grad::grad_root_tensor;
pub use model::TensorTreeModel;
pub use sample::sample;
pub use tensor::{contract, svd_truncate, DenseTensor, SvdResult};
pub use topology::{CenterMode, Edge, NodeId, Pairing, TreeTopology};
pub use train::{
    next_target, reconnect_step, topology_consistency, train, train_from_model, train_with_hooks,
    BatchRefresh, BestModel, InitTopology, StepOutcome, TrainConfig, TrainEvent, TrainReport,
};
