//! Dense numerics: tensors, a reverse-mode tape, and RMSProp.

pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{Param, ParamSet, RmsProp};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
