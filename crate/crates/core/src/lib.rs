pub mod conv;
pub mod error;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub mod gcn;
pub mod graph;
pub mod hourglass;
pub mod model;
pub mod synth;
pub mod metrics;
pub mod infer;
pub mod train;
pub mod io;
pub mod gradcheck;
