//! Keeps the guide in `book/` honest: every chapter is included here as a
//! module doc, so `cargo test --doc` compiles and runs each code block.
//! A chapter module per file makes doc-test failures point at the chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/matrix-geometry.md")]
pub mod matrix_geometry {}

#[doc = include_str!("../../../book/src/systems-and-simulation.md")]
pub mod systems_and_simulation {}

#[doc = include_str!("../../../book/src/storage-functions.md")]
pub mod storage_functions {}

#[doc = include_str!("../../../book/src/error-bounds.md")]
pub mod error_bounds {}

#[doc = include_str!("../../../book/src/synthesis-pipeline.md")]
pub mod synthesis_pipeline {}

#[doc = include_str!("../../../book/src/network-composition.md")]
pub mod network_composition {}

#[doc = include_str!("../../../book/src/case-study.md")]
pub mod case_study {}

#[doc = include_str!("../../../book/src/cli-reference.md")]
pub mod cli_reference {}
