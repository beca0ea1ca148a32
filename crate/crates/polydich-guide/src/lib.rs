//! Doc-test harness for the guide in `book/`.
//!
//! mdBook cannot run its code blocks as tests, so every chapter is included
//! here as module documentation and `cargo test --doc` compiles and runs
//! each `rust` block. Chapter text and tested snippets can never drift
//! apart: this crate *is* the book's source.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/cocycles.md")]
pub mod cocycles {}

#[doc = include_str!("../../../book/src/dichotomies.md")]
pub mod dichotomies {}

#[doc = include_str!("../../../book/src/spectrum.md")]
pub mod spectrum {}

#[doc = include_str!("../../../book/src/linearization.md")]
pub mod linearization {}

#[doc = include_str!("../../../book/src/continuous.md")]
pub mod continuous {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
