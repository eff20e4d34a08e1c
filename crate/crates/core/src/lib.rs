//! A desk-scale laboratory for bottleneck adapters and attention-based
//! adapter composition inside a miniature transformer encoder.
//!
//! The crate builds everything from a small float64 autodiff tape upward:
//!
//! - [`tape`]: reverse-mode automatic differentiation over dense matrices
//! - [`optim`]: AdamW with decoupled weight decay and the linear decay schedule
//! - [`gradcheck`]: finite-difference verification of every gradient path
//! - [`backbone`]: the transformer encoder with masked-token pretraining and
//!   tap points where adapters and fusion hook in
//! - [`adapters`]: bottleneck adapter modules over the full architecture grid
//! - [`fusion`]: the per-layer query/key/value mixer that composes N adapters
//! - [`training`]: single-task, multi-task, fusion and baseline pipelines
//! - [`tasks`]: deterministic synthetic classification tasks with
//!   controllable relatedness
//! - [`checkpoint`]: the binary tensor-container format shared by backbone,
//!   adapter and fusion checkpoints
//!
//! Training runs single-threaded over a dynamic tape; independent runs are
//! freely parallel because finished parameter sets are plain owned data.

pub mod adapters;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::SplitRng;
pub use tape::{Activation, Tape, Var};
pub use tensor::{ParamGroup, Tensor};
