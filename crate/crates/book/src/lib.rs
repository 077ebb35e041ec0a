//! Compiles every chapter of the guide in `book/src` as rustdoc, so that
//! `cargo test` runs its code blocks. One module per chapter keeps failures
//! traceable to a file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/containers.md")]
pub mod containers {}
#[doc = include_str!("../../../book/src/merging.md")]
pub mod merging {}
#[doc = include_str!("../../../book/src/trimming.md")]
pub mod trimming {}
#[doc = include_str!("../../../book/src/conflict.md")]
pub mod conflict {}
#[doc = include_str!("../../../book/src/benchmark.md")]
pub mod benchmark {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/rng.md")]
pub mod rng {}
