//! The book chapters under `book/src`, re-exposed as rustdoc pages.
//!
//! Each module below carries one chapter as its documentation, which
//! makes every fenced Rust block in the book a doc test of this crate.
//! `cargo test -p guide` therefore fails whenever the book drifts out
//! of sync with the library's actual interface.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tape.md")]
pub mod tape {}

#[doc = include_str!("../../../book/src/variational.md")]
pub mod variational {}

#[doc = include_str!("../../../book/src/recurrent.md")]
pub mod recurrent {}

#[doc = include_str!("../../../book/src/attention.md")]
pub mod attention {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/prediction.md")]
pub mod prediction {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
