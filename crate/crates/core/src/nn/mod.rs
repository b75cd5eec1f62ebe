//! Minimal tensor-network machinery: kernels, a reverse-mode tape, and
//! parameter bookkeeping.

pub mod kernels;
pub mod layers;
pub mod params;
pub mod tape;

pub use kernels::PoolMode;
pub use params::{Gradients, Initializer, ParamId, ParamStore};
pub use tape::{Tape, Var};
