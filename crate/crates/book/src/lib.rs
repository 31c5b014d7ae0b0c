//! Every Rust block in `book/src` runs as a doc-test of this crate.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/teacher.md")]
pub mod teacher {}

#[doc = include_str!("../../../book/src/few-step.md")]
pub mod few_step {}

#[doc = include_str!("../../../book/src/pairwise.md")]
pub mod pairwise {}

#[doc = include_str!("../../../book/src/finetuning.md")]
pub mod finetuning {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

#[doc = include_str!("../../../book/src/acceptance.md")]
pub mod acceptance {}
