// Negated float comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ann;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod events;
pub mod flow;
pub mod formats;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod snn;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type of the library.
pub type Real = f64;
pub type Tensor = tensor::Tensor<Real>;
pub type Tape = tape::Tape<Real>;
pub type FlowField = flow::FlowField<Real>;
pub use tape::Var;
