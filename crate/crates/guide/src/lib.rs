//! Book listings as doc-tests.
//!
//! mdbook cannot link against workspace crates, so each chapter is
//! included here and its Rust blocks run under `cargo test --doc`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/tensor-engine.md")]
pub mod tensor_engine {}
#[doc = include_str!("../../../book/src/unet.md")]
pub mod unet {}
#[doc = include_str!("../../../book/src/model-size.md")]
pub mod model_size {}
#[doc = include_str!("../../../book/src/synthetic-task.md")]
pub mod synthetic_task {}
#[doc = include_str!("../../../book/src/noise-objective.md")]
pub mod noise_objective {}
#[doc = include_str!("../../../book/src/interpretation.md")]
pub mod interpretation {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/determinism.md")]
pub mod determinism {}
