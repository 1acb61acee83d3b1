//! Runs the code listings in `book/src` as doc-tests, one module per
//! chapter so a failure points at its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/environments.md")]
pub mod environments {}
#[doc = include_str!("../../../book/src/balance.md")]
pub mod balance {}
#[doc = include_str!("../../../book/src/contrast.md")]
pub mod contrast {}
#[doc = include_str!("../../../book/src/buffers.md")]
pub mod buffers {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/adaptation.md")]
pub mod adaptation {}
#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}
