//! Two-expert token routing between a quadratic-cost attention expert and a
//! linear-cost state-space expert.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod expert;
pub mod metrics;
pub mod moe;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod router;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::{Backend, Eager, Tape, Tensor, Var};
