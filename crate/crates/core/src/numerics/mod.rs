//! Dense tensors with a reverse-mode gradient tape.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use ops::conv::Conv2dSpec;
pub use ops::shape::concat;
pub use params::{Bound, ParamStore};
pub use rng::RngState;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
