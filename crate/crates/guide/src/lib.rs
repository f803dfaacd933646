//! The user guide in `book/`, compiled so that its Rust snippets run as
//! doctests. Build the rendered book with `mdbook build book`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/fixed-point.md")]
pub mod fixed_point {}

#[doc = include_str!("../../../book/src/sharing.md")]
pub mod sharing {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/defender.md")]
pub mod defender {}

#[doc = include_str!("../../../book/src/networked.md")]
pub mod networked {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
