//! Small reverse-mode differentiation layer used by the agent, the level
//! generator and the probe.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{ConvGeom, Graph, Var};
pub use layers::{CellKind, Conv2d, Linear, RecurrentCell, RecurrentState};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
