//! Missing-modality reconstruction with distribution-free uncertainty
//! estimation and first-order error propagation through a frozen multimodal
//! network.

pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod propagation;
pub mod reconstruction;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
