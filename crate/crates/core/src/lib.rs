//! Distilled 3D networks for video action recognition at desk scale.
//!
//! A small reverse-mode tensor engine drives a separable 3D CNN that can act
//! as an RGB (spatial) or optical-flow (temporal) stream. TV-L1 flow serves as
//! pseudo-groundtruth for flow-decoding probes and as the temporal stream's
//! input; the spatial stream is distilled from the temporal stream's logits.

pub mod checkpoint;
pub mod conv;
pub mod dataset;
pub mod decoders;
pub mod distill;
pub mod error;
pub mod flow_repr;
pub mod gradcheck;
pub mod graph;
pub mod kvconfig;
pub mod net;
pub mod tensor;
pub mod train;
pub mod tvl1;

pub use conv::{ConvSpec, Padding};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use kvconfig::KvConfig;
pub use net::{LayerName, Network, NetworkConfig};
pub use tensor::{Parameters, Tensor};
