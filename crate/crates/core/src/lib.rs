//! Structured channel pruning driven by Taylor-expansion importance criteria.

pub mod checkpoint;
pub mod cli;
pub mod compact;
pub mod criteria;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod flops;
pub mod gates;
pub mod graph;
pub mod kernels;
pub mod models;
pub mod oracle;
pub mod stats;
pub mod tensor;

pub use compact::compact;
pub use error::{Error, Result};
pub use flops::count_flops_params;
pub use gates::{insert_gates, PruneMask, Removal, Unit};
pub use graph::{GateId, GateState, Mode, NetworkGraph, NodeId, Op, Parameter, Placement};
pub use models::{build_lenet3, build_tiny_resnet, ResNetConfig};
pub use tensor::{Scalar, Tensor};
